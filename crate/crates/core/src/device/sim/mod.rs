//! Deterministic simulated device driven by a declarative app graph.
//!
//! The device starts on a built-in launcher showing one icon per app. `Home`
//! returns there; `open` and launcher icons jump to an app's home screen.

mod render;
mod world;

use std::sync::Arc;

pub use world::{
    check_success, interpolate, template_vars, AppSpec, Difficulty, Direction, Display,
    ElementKind, ElementSpec, ScreenSpec, SimState, SimTask, StateValue, SuccessPredicate,
    SwipeSpec, Transition, World, WorldError, BACK_TARGET, LAUNCHER,
};

use super::{Backend, Device, DeviceError, DeviceInfo, ExecReport};
use crate::domain::{Action, Point, Rgb, Screenshot, SystemButton};
use crate::perception::BoundingBox;
use render::{Canvas, HEADER_HEIGHT};

/// Virtual milliseconds each executed action takes.
const ACTION_MS: u64 = 500;
const LAUNCHER_BG: Rgb = Rgb::new(0x24, 0x2a, 0x33);

#[derive(Debug, Clone, PartialEq)]
struct Snapshot {
    stack: Vec<String>,
    state: SimState,
    focus: Option<String>,
}

pub struct SimDevice {
    world: Arc<World>,
    info: DeviceInfo,
    stack: Vec<String>,
    state: SimState,
    focus: Option<String>,
    clock_ms: u64,
    captures: usize,
}

impl SimDevice {
    pub fn new(world: Arc<World>) -> Self {
        let info = DeviceInfo {
            width: world.display.width,
            height: world.display.height,
            device_id: "sim".into(),
            backend: Backend::Sim,
        };
        let state = world.state.clone();
        Self { world, info, stack: vec![LAUNCHER.into()], state, focus: None, clock_ms: 0, captures: 0 }
    }

    /// Fresh device with `task`'s initial state applied.
    pub fn for_task(world: Arc<World>, task: &SimTask) -> Self {
        let mut dev = Self::new(world);
        dev.state.extend(task.initial.clone());
        dev
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn current_screen(&self) -> &str {
        self.stack.last().expect("history is never empty")
    }

    pub fn focused(&self) -> Option<&str> {
        self.focus.as_deref()
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot { stack: self.stack.clone(), state: self.state.clone(), focus: self.focus.clone() }
    }

    fn launcher_icons(&self) -> Vec<(BoundingBox, &AppSpec)> {
        let cols = 3u32;
        let cell = self.info.width / cols;
        self.world
            .apps
            .iter()
            .enumerate()
            .map(|(i, app)| {
                let (col, row) = (i as u32 % cols, i as u32 / cols);
                let rect = BoundingBox::new(col * cell + 8, HEADER_HEIGHT + 24 + row * 104, cell - 16, 88);
                (rect, app)
            })
            .filter(|(r, _)| r.fits_within(self.info.width, self.info.height))
            .collect()
    }

    fn visible_elements(&self) -> Vec<&ElementSpec> {
        let screen = self.current_screen();
        self.world.elements_on(screen).filter(|e| e.visible(&self.state)).collect()
    }

    fn element_at(&self, p: Point) -> Option<&ElementSpec> {
        self.visible_elements().into_iter().rev().find(|e| e.rect().contains_point(p.x, p.y))
    }

    fn go_to(&mut self, target: &str) {
        if target == BACK_TARGET {
            if self.stack.len() > 1 {
                self.stack.pop();
            }
        } else if target == LAUNCHER {
            self.stack = vec![LAUNCHER.into()];
        } else if self.current_screen() != target {
            self.stack.push(target.to_string());
        }
    }

    fn apply(&mut self, t: &Transition) {
        let assigned: Vec<(String, StateValue)> = t
            .set
            .iter()
            .map(|(k, v)| {
                let v = match v {
                    StateValue::Str(s) => StateValue::Str(interpolate(s, &self.state)),
                    other => other.clone(),
                };
                (k.clone(), v)
            })
            .collect();
        self.state.extend(assigned);
        for var in &t.toggle {
            let on = matches!(self.state.get(var), Some(StateValue::Bool(true)));
            self.state.insert(var.clone(), StateValue::Bool(!on));
        }
        if let Some(target) = &t.target {
            self.go_to(target);
        }
    }

    fn open_app(&mut self, name: &str) -> Result<(), DeviceError> {
        let app = self.world.app(name).ok_or_else(|| DeviceError::UnknownApp(name.to_string()))?;
        self.stack = vec![LAUNCHER.into(), app.home.clone()];
        Ok(())
    }

    fn screen_handler(&self, key: &str) -> Option<Transition> {
        self.world.screen(self.current_screen())?.on_key.get(key).cloned()
    }

    fn click(&mut self, p: Point) -> Result<(), DeviceError> {
        if self.current_screen() == LAUNCHER {
            let hit = self.launcher_icons().into_iter().find(|(r, _)| r.contains_point(p.x, p.y));
            if let Some((_, app)) = hit {
                let name = app.name.clone();
                self.open_app(&name)?;
            }
            return Ok(());
        }
        let Some(el) = self.element_at(p).cloned() else { return Ok(()) };
        match el.kind {
            ElementKind::TextField => self.focus = Some(el.id.clone()),
            ElementKind::Toggle => {
                if let Some(f) = &el.field {
                    self.apply(&Transition { toggle: vec![f.clone()], ..Default::default() });
                }
            }
            _ => {}
        }
        if let Some(t) = &el.on_click {
            self.apply(t);
        }
        Ok(())
    }

    fn focused_field(&self) -> Option<String> {
        let id = self.focus.as_ref()?;
        self.visible_elements().into_iter().find(|e| &e.id == id)?.field.clone()
    }

    fn swipe(&mut self, from: Point, to: Point) {
        let dx = to.x as i64 - from.x as i64;
        let dy = to.y as i64 - from.y as i64;
        if dx == 0 && dy == 0 {
            return;
        }
        let dir = if dx.abs() > dy.abs() {
            if dx > 0 { Direction::Right } else { Direction::Left }
        } else if dy > 0 {
            Direction::Down
        } else {
            Direction::Up
        };
        let handler = self
            .world
            .screen(self.current_screen())
            .and_then(|s| s.on_swipe.iter().find(|sw| sw.direction == dir))
            .map(SwipeSpec::transition);
        if let Some(t) = handler {
            self.apply(&t);
        }
    }

    fn render(&self) -> Screenshot {
        let (w, h) = (self.info.width, self.info.height);
        let screen_id = self.current_screen();
        if screen_id == LAUNCHER {
            let mut c = Canvas::new(w, h, LAUNCHER_BG);
            render::header(&mut c, w, "Home", Rgb::new(0x11, 0x14, 0x18));
            for (rect, app) in self.launcher_icons() {
                let color = Rgb::from_hex(&app.color).expect("validated");
                c.fill(rect, color);
                c.stroke(rect, Rgb::new(0xff, 0xff, 0xff));
                render::element(&mut c, BoundingBox::new(rect.x, rect.bottom() - 28, rect.width, 28), ElementKind::Static, &app.name, color, false);
            }
            return c.finish();
        }
        let screen = self.world.screen(screen_id).expect("stack holds valid screens");
        let bg = Rgb::from_hex(&screen.background).expect("validated");
        let mut c = Canvas::new(w, h, bg);
        if let Some(title) = &screen.title {
            let app = self.world.app(&screen.app).expect("validated");
            render::header(&mut c, w, &interpolate(title, &self.state), Rgb::from_hex(&app.color).expect("validated"));
        }
        for el in self.visible_elements() {
            let label = match (el.kind, &el.field) {
                (ElementKind::TextField, Some(f)) if el.label.is_empty() => {
                    self.state.get(f).map(|v| v.to_string()).unwrap_or_default()
                }
                (ElementKind::Toggle, Some(f)) => {
                    let on = matches!(self.state.get(f), Some(StateValue::Bool(true)));
                    format!("{} [{}]", interpolate(&el.label, &self.state), if on { "ON" } else { "OFF" })
                }
                _ => interpolate(&el.label, &self.state),
            };
            let focused = self.focus.as_deref() == Some(el.id.as_str());
            render::element(&mut c, el.rect(), el.kind, &label, bg, focused);
        }
        c.finish()
    }

    fn step(&mut self, action: &Action) -> Result<(), DeviceError> {
        match action {
            Action::Click { coordinate } => self.click(*coordinate)?,
            Action::LongPress { coordinate, .. } => {
                if let Some(t) = self.element_at(*coordinate).and_then(|e| e.on_long_press.clone()) {
                    self.apply(&t);
                }
            }
            Action::Swipe { coordinate, coordinate2 } => self.swipe(*coordinate, *coordinate2),
            Action::Type { text } => {
                if let Some(field) = self.focused_field() {
                    let mut value = self.state.get(&field).map(|v| v.to_string()).unwrap_or_default();
                    value.push_str(text);
                    self.state.insert(field, StateValue::Str(value));
                }
            }
            Action::ClearText => {
                if let Some(field) = self.focused_field() {
                    if self.state.get(&field).is_some_and(|v| !v.to_string().is_empty()) {
                        self.state.insert(field, StateValue::Str(String::new()));
                    }
                }
            }
            Action::Key { text } => {
                if let Some(t) = self.screen_handler(&text.trim().to_lowercase()) {
                    self.apply(&t);
                }
            }
            Action::SystemButton { button } => match button {
                SystemButton::Home => self.stack = vec![LAUNCHER.into()],
                SystemButton::Back => match self.screen_handler("back") {
                    Some(t) => self.apply(&t),
                    None => self.go_to(BACK_TARGET),
                },
                SystemButton::Menu | SystemButton::Enter => {
                    let key = button.as_str().to_lowercase();
                    if let Some(t) = self.screen_handler(&key) {
                        self.apply(&t);
                    }
                }
            },
            Action::Open { text } => self.open_app(text)?,
            Action::Wait { .. } | Action::TakeNote { .. } | Action::Answer { .. } | Action::Terminate { .. } => {}
        }
        Ok(())
    }
}

impl Device for SimDevice {
    fn info(&self) -> &DeviceInfo {
        &self.info
    }

    fn capture(&mut self) -> Result<Screenshot, DeviceError> {
        let shot = self.render().with_meta(self.clock_ms, self.captures);
        self.captures += 1;
        Ok(shot)
    }

    fn execute(&mut self, action: &Action) -> Result<ExecReport, DeviceError> {
        if let Err(e) = action.validate(self.info.width, self.info.height) {
            return Ok(ExecReport::Rejected(e.to_string()));
        }
        if let Action::Wait { time } = action {
            self.clock_ms += (time * 1000.0).round() as u64;
            return Ok(ExecReport::Applied);
        }
        if matches!(action, Action::TakeNote { .. } | Action::Answer { .. } | Action::Terminate { .. }) {
            return Ok(ExecReport::NoEffect);
        }
        let before = self.snapshot();
        if let Err(e) = self.step(action) {
            self.stack = before.stack;
            self.state = before.state;
            self.focus = before.focus;
            return Err(e);
        }
        if self.stack != before.stack {
            self.focus = None;
        }
        if self.snapshot() == before {
            return Ok(ExecReport::NoEffect);
        }
        self.clock_ms += ACTION_MS;
        Ok(ExecReport::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{RunResult, RunStatus, TerminateStatus};
    use proptest::prelude::*;

    const WORLD: &str = r##"
[display]
width = 200
height = 300

[state]
title = ""
wifi = false
opened = ""

[[apps]]
name = "Tasks"
home = "list"
package = "org.tasks"

[[apps]]
name = "Settings"
home = "settings"
color = "#555555"

[[screens]]
id = "list"
app = "Tasks"
title = "Tasks"
on_swipe = [{ direction = "up", target = "more" }]

[[screens]]
id = "edit"
app = "Tasks"
title = "New task"
background = "#fafafa"

[[screens]]
id = "more"
app = "Tasks"

[[screens]]
id = "empty"
app = "Tasks"
background = "#123456"

[[screens]]
id = "settings"
app = "Settings"

[[elements]]
id = "add"
screen = "list"
kind = "button"
bounds = [10, 60, 100, 40]
label = "Add"
on_click = { target = "edit" }

[[elements]]
id = "title_field"
screen = "edit"
kind = "text_field"
bounds = [10, 60, 180, 40]
field = "title"

[[elements]]
id = "save"
screen = "edit"
kind = "button"
bounds = [10, 120, 80, 40]
label = "Save"
on_click = { target = "@back", set = { opened = "saved {{title}}" } }

[[elements]]
id = "wifi"
screen = "settings"
kind = "toggle"
bounds = [10, 60, 180, 40]
label = "Wi-Fi"
field = "wifi"

[[tasks]]
id = "add_milk"
instruction = "Add a task called Milk"
app = "Tasks"
difficulty = "easy"
success = { state = { title = "Milk" } }

[[tasks]]
id = "count"
instruction = "How many tasks?"
difficulty = "easy"
success = { answer = "3" }
"##;

    fn world() -> Arc<World> {
        Arc::new(World::from_toml(WORLD).unwrap())
    }

    fn click(x: u32, y: u32) -> Action {
        Action::Click { coordinate: Point::new(x, y) }
    }

    fn open(app: &str) -> Action {
        Action::Open { text: app.into() }
    }

    #[test]
    fn screen_without_elements_is_uniform() {
        let mut dev = SimDevice::new(world());
        dev.stack.push("empty".into());
        let shot = dev.capture().unwrap();
        assert!(shot.pixels().chunks(3).all(|p| p == [0x12, 0x34, 0x56]));
    }

    #[test]
    fn captures_are_deterministic() {
        let mut dev = SimDevice::new(world());
        dev.execute(&open("tasks")).unwrap();
        let a = dev.capture().unwrap();
        let b = dev.capture().unwrap();
        assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn click_follows_transition_and_renders_target() {
        let mut dev = SimDevice::new(world());
        dev.execute(&open("Tasks")).unwrap();
        let list = dev.capture().unwrap();
        assert_eq!(dev.execute(&click(50, 80)).unwrap(), ExecReport::Applied);
        assert_eq!(dev.current_screen(), "edit");
        assert_ne!(dev.capture().unwrap().pixels(), list.pixels());
    }

    #[test]
    fn background_click_is_no_effect() {
        let mut dev = SimDevice::new(world());
        dev.execute(&open("Tasks")).unwrap();
        let before = dev.state().clone();
        assert_eq!(dev.execute(&click(150, 250)).unwrap(), ExecReport::NoEffect);
        assert_eq!(dev.state(), &before);
    }

    #[test]
    fn typing_into_focused_field() {
        let mut dev = SimDevice::new(world());
        for a in [open("Tasks"), click(50, 80), click(50, 80)] {
            dev.execute(&a).unwrap();
        }
        assert_eq!(dev.focused(), Some("title_field"));
        dev.execute(&Action::Type { text: "Milk".into() }).unwrap();
        assert_eq!(dev.state()["title"], StateValue::from("Milk"));
        dev.execute(&click(20, 130)).unwrap();
        assert_eq!(dev.current_screen(), "list");
        assert_eq!(dev.state()["opened"], StateValue::from("saved Milk"));
        assert_eq!(dev.focused(), None);
    }

    #[test]
    fn type_without_focus_does_nothing() {
        let mut dev = SimDevice::new(world());
        dev.execute(&open("Tasks")).unwrap();
        assert_eq!(dev.execute(&Action::Type { text: "x".into() }).unwrap(), ExecReport::NoEffect);
    }

    #[test]
    fn clear_text_empties_field() {
        let w = world();
        let task = SimTask { initial: [("title".to_string(), StateValue::from("Untitled"))].into(), ..w.tasks[0].clone() };
        let mut dev = SimDevice::for_task(w, &task);
        for a in [open("Tasks"), click(50, 80), click(50, 80), Action::ClearText] {
            dev.execute(&a).unwrap();
        }
        assert_eq!(dev.state()["title"], StateValue::from(""));
        assert_eq!(dev.execute(&Action::ClearText).unwrap(), ExecReport::NoEffect);
    }

    #[test]
    fn swipe_uses_dominant_direction() {
        let mut dev = SimDevice::new(world());
        dev.execute(&open("Tasks")).unwrap();
        let sideways = Action::Swipe { coordinate: Point::new(20, 200), coordinate2: Point::new(180, 150) };
        assert_eq!(dev.execute(&sideways).unwrap(), ExecReport::NoEffect);
        let up = Action::Swipe { coordinate: Point::new(100, 250), coordinate2: Point::new(110, 100) };
        assert_eq!(dev.execute(&up).unwrap(), ExecReport::Applied);
        assert_eq!(dev.current_screen(), "more");
    }

    #[test]
    fn back_pops_and_home_returns_to_launcher() {
        let mut dev = SimDevice::new(world());
        dev.execute(&open("Tasks")).unwrap();
        dev.execute(&click(50, 80)).unwrap();
        let back = Action::SystemButton { button: SystemButton::Back };
        dev.execute(&back).unwrap();
        assert_eq!(dev.current_screen(), "list");
        dev.execute(&Action::SystemButton { button: SystemButton::Home }).unwrap();
        assert_eq!(dev.current_screen(), LAUNCHER);
        assert_eq!(dev.execute(&back).unwrap(), ExecReport::NoEffect);
    }

    #[test]
    fn launcher_icons_open_apps() {
        let mut dev = SimDevice::new(world());
        let (rect, _) = dev.launcher_icons()[1];
        dev.execute(&click(rect.x + 5, rect.y + 5)).unwrap();
        assert_eq!(dev.current_screen(), "settings");
    }

    #[test]
    fn toggles_flip_their_field() {
        let mut dev = SimDevice::new(world());
        dev.execute(&open("settings")).unwrap();
        dev.execute(&click(50, 70)).unwrap();
        assert_eq!(dev.state()["wifi"], StateValue::Bool(true));
    }

    #[test]
    fn unknown_app_leaves_state() {
        let mut dev = SimDevice::new(world());
        assert!(matches!(dev.execute(&open("Camera")), Err(DeviceError::UnknownApp(_))));
        assert_eq!(dev.current_screen(), LAUNCHER);
        assert!(dev.execute(&open("org.tasks")).is_ok());
    }

    #[test]
    fn orchestrator_actions_are_no_effect() {
        let mut dev = SimDevice::new(world());
        for a in [
            Action::TakeNote { text: "n".into() },
            Action::Answer { text: "3".into() },
            Action::Terminate { status: TerminateStatus::Success },
        ] {
            assert_eq!(dev.execute(&a).unwrap(), ExecReport::NoEffect);
        }
        assert!(matches!(dev.execute(&click(200, 0)).unwrap(), ExecReport::Rejected(_)));
    }

    #[test]
    fn success_predicates() {
        let w = world();
        let result = |answer: Option<&str>| RunResult {
            status: RunStatus::Success,
            steps: vec![],
            answer: answer.map(String::from),
            failure_label: None,
        };
        let mut state = w.state.clone();
        state.insert("title".into(), "Milk".into());
        assert!(check_success(&w.tasks[0], &state, &result(None)));
        assert!(check_success(&w.tasks[1], &state, &result(Some("3"))));
        assert!(!check_success(&w.tasks[1], &state, &result(None)));
    }

    #[test]
    fn loader_rejects_bad_worlds() {
        let unknown_key = format!("{WORLD}\nbogus = 1\n");
        assert!(matches!(World::from_toml(&unknown_key), Err(WorldError::Parse(_))));
        let bad_target = WORLD.replace("target = \"more\"", "target = \"nowhere\"");
        assert!(matches!(World::from_toml(&bad_target), Err(WorldError::Invalid(_))));
        let oob = WORLD.replace("bounds = [10, 60, 100, 40]", "bounds = [150, 60, 100, 40]");
        assert!(matches!(World::from_toml(&oob), Err(WorldError::Invalid(_))));
        let undeclared = WORLD.replace("field = \"wifi\"", "field = \"bluetooth\"");
        assert!(matches!(World::from_toml(&undeclared), Err(WorldError::Invalid(_))));
    }

    fn arb_action() -> impl Strategy<Value = Action> {
        prop_oneof![
            (0u32..200, 0u32..300).prop_map(|(x, y)| click(x, y)),
            Just(open("Tasks")),
            Just(open("Settings")),
            Just(Action::Type { text: "ab".into() }),
            Just(Action::ClearText),
            Just(Action::SystemButton { button: SystemButton::Back }),
            Just(Action::SystemButton { button: SystemButton::Home }),
            Just(Action::Swipe { coordinate: Point::new(100, 250), coordinate2: Point::new(100, 50) }),
        ]
    }

    proptest! {
        #[test]
        fn replay_is_deterministic(actions in prop::collection::vec(arb_action(), 0..12)) {
            let run = || {
                let mut dev = SimDevice::new(world());
                let reports: Vec<_> = actions.iter().map(|a| dev.execute(a).unwrap()).collect();
                (reports, dev.state().clone(), dev.capture().unwrap())
            };
            let (r1, s1, c1) = run();
            let (r2, s2, c2) = run();
            prop_assert_eq!(r1, r2);
            prop_assert_eq!(s1, s2);
            prop_assert_eq!(c1.pixels(), c2.pixels());
        }

        #[test]
        fn no_effect_never_mutates(actions in prop::collection::vec(arb_action(), 1..12)) {
            let mut dev = SimDevice::new(world());
            for a in &actions {
                let before = dev.snapshot();
                if dev.execute(a).unwrap() != ExecReport::Applied {
                    prop_assert_eq!(dev.snapshot(), before);
                }
            }
        }
    }
}

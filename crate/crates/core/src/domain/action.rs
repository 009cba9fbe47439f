//! Device actions and their canonical one-line serialization.
//!
//! The canonical form is a single JSON object with `action_type` first and the
//! parameters in table order, rendered with `", "` / `": "` separators:
//!
//! ```text
//! {"action_type": "swipe", "coordinate": [120, 400], "coordinate2": [120, 1200]}
//! ```

use std::fmt;
use std::io;
use std::str::FromStr;

use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionError {
    #[error("unknown action type `{0}`")]
    UnknownActionType(String),
    #[error("{action_type}: missing parameter `{param}`")]
    MissingParameter { action_type: ActionType, param: &'static str },
    #[error("{action_type}: unexpected parameter `{param}`")]
    UnexpectedParameter { action_type: ActionType, param: String },
    #[error("{action_type}: invalid parameter `{param}`: {reason}")]
    InvalidParameter { action_type: ActionType, param: &'static str, reason: String },
    #[error("coordinate ({x}, {y}) outside screen {width}x{height}")]
    OutOfBounds { x: u32, y: u32, width: u32, height: u32 },
    #[error("malformed action: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionType {
    Key,
    Click,
    LongPress,
    Swipe,
    Type,
    ClearText,
    SystemButton,
    Open,
    Wait,
    TakeNote,
    Answer,
    Terminate,
}

impl ActionType {
    pub const ALL: [ActionType; 12] = [
        ActionType::Key,
        ActionType::Click,
        ActionType::LongPress,
        ActionType::Swipe,
        ActionType::Type,
        ActionType::ClearText,
        ActionType::SystemButton,
        ActionType::Open,
        ActionType::Wait,
        ActionType::TakeNote,
        ActionType::Answer,
        ActionType::Terminate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionType::Key => "key",
            ActionType::Click => "click",
            ActionType::LongPress => "long_press",
            ActionType::Swipe => "swipe",
            ActionType::Type => "type",
            ActionType::ClearText => "clear_text",
            ActionType::SystemButton => "system_button",
            ActionType::Open => "open",
            ActionType::Wait => "wait",
            ActionType::TakeNote => "take_note",
            ActionType::Answer => "answer",
            ActionType::Terminate => "terminate",
        }
    }

    /// Parameter keys in canonical order.
    pub fn params(self) -> &'static [&'static str] {
        match self {
            ActionType::Key | ActionType::Type | ActionType::Open => &["text"],
            ActionType::TakeNote | ActionType::Answer => &["text"],
            ActionType::Click => &["coordinate"],
            ActionType::LongPress => &["coordinate", "time"],
            ActionType::Swipe => &["coordinate", "coordinate2"],
            ActionType::ClearText => &[],
            ActionType::SystemButton => &["button"],
            ActionType::Wait => &["time"],
            ActionType::Terminate => &["status"],
        }
    }
}

impl fmt::Display for ActionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionType {
    type Err = ActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ActionError::UnknownActionType(s.to_string()))
    }
}

/// Pixel coordinate, serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct Point {
    pub x: u32,
    pub y: u32,
}

impl Point {
    pub const fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

impl From<[u32; 2]> for Point {
    fn from([x, y]: [u32; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [u32; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SystemButton {
    Back,
    Home,
    Menu,
    Enter,
}

impl SystemButton {
    pub fn as_str(self) -> &'static str {
        match self {
            SystemButton::Back => "Back",
            SystemButton::Home => "Home",
            SystemButton::Menu => "Menu",
            SystemButton::Enter => "Enter",
        }
    }
}

impl FromStr for SystemButton {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "back" => Ok(SystemButton::Back),
            "home" => Ok(SystemButton::Home),
            "menu" => Ok(SystemButton::Menu),
            "enter" => Ok(SystemButton::Enter),
            _ => Err(format!("expected one of Back, Home, Menu, Enter; got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminateStatus {
    Success,
    Failure,
}

impl TerminateStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminateStatus::Success => "success",
            TerminateStatus::Failure => "failure",
        }
    }
}

/// One device operation. Structural equality ignores the operator's thought and
/// description because those live on [`super::ActionOutput`], not here.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Key { text: String },
    Click { coordinate: Point },
    LongPress { coordinate: Point, time: f64 },
    Swipe { coordinate: Point, coordinate2: Point },
    Type { text: String },
    ClearText,
    SystemButton { button: SystemButton },
    Open { text: String },
    Wait { time: f64 },
    TakeNote { text: String },
    Answer { text: String },
    Terminate { status: TerminateStatus },
}

/// Whether two actions would have the same device effect.
pub fn action_equals(a: &Action, b: &Action) -> bool {
    a == b
}

impl Action {
    pub fn action_type(&self) -> ActionType {
        match self {
            Action::Key { .. } => ActionType::Key,
            Action::Click { .. } => ActionType::Click,
            Action::LongPress { .. } => ActionType::LongPress,
            Action::Swipe { .. } => ActionType::Swipe,
            Action::Type { .. } => ActionType::Type,
            Action::ClearText => ActionType::ClearText,
            Action::SystemButton { .. } => ActionType::SystemButton,
            Action::Open { .. } => ActionType::Open,
            Action::Wait { .. } => ActionType::Wait,
            Action::TakeNote { .. } => ActionType::TakeNote,
            Action::Answer { .. } => ActionType::Answer,
            Action::Terminate { .. } => ActionType::Terminate,
        }
    }

    pub fn is_terminate(&self) -> bool {
        matches!(self, Action::Terminate { .. })
    }

    /// Coordinates this action touches, in parameter order.
    pub fn coordinates(&self) -> Vec<Point> {
        match self {
            Action::Click { coordinate } | Action::LongPress { coordinate, .. } => {
                vec![*coordinate]
            }
            Action::Swipe { coordinate, coordinate2 } => vec![*coordinate, *coordinate2],
            _ => Vec::new(),
        }
    }

    /// Bounds and duration checks against a `width` x `height` screen.
    ///
    /// Coordinates must lie in the half-open range `[0, width) x [0, height)`.
    pub fn validate(&self, width: u32, height: u32) -> Result<(), ActionError> {
        for p in self.coordinates() {
            if p.x >= width || p.y >= height {
                return Err(ActionError::OutOfBounds { x: p.x, y: p.y, width, height });
            }
        }
        match self {
            Action::LongPress { time, .. } | Action::Wait { time } if !(time.is_finite() && *time > 0.0) => {
                return Err(ActionError::InvalidParameter {
                    action_type: self.action_type(),
                    param: "time",
                    reason: format!("must be a positive number of seconds, got {time}"),
                });
            }
            _ => {}
        }
        Ok(())
    }

    /// Canonical one-line rendering.
    pub fn to_canonical(&self) -> String {
        let mut out = Vec::with_capacity(64);
        let mut ser = serde_json::Serializer::with_formatter(&mut out, SpacedFormatter);
        self.serialize(&mut ser).expect("action serialization is infallible");
        String::from_utf8(out).expect("serde_json emits utf-8")
    }

    pub fn parse(text: &str) -> Result<Action, ActionError> {
        let value: Value =
            serde_json::from_str(text.trim()).map_err(|e| ActionError::Malformed(e.to_string()))?;
        Action::from_value(&value)
    }

    pub fn from_value(value: &Value) -> Result<Action, ActionError> {
        let obj = value
            .as_object()
            .ok_or_else(|| ActionError::Malformed("expected a JSON object".into()))?;
        let type_name = obj
            .get("action_type")
            .ok_or_else(|| ActionError::Malformed("missing `action_type`".into()))?
            .as_str()
            .ok_or_else(|| ActionError::Malformed("`action_type` must be a string".into()))?;
        let action_type: ActionType = type_name.parse()?;

        for key in obj.keys() {
            if key != "action_type" && !action_type.params().contains(&key.as_str()) {
                return Err(ActionError::UnexpectedParameter { action_type, param: key.clone() });
            }
        }

        let p = Params { obj, action_type };
        Ok(match action_type {
            ActionType::Key => Action::Key { text: p.text("text")? },
            ActionType::Click => Action::Click { coordinate: p.point("coordinate")? },
            ActionType::LongPress => Action::LongPress {
                coordinate: p.point("coordinate")?,
                time: p.number("time")?,
            },
            ActionType::Swipe => Action::Swipe {
                coordinate: p.point("coordinate")?,
                coordinate2: p.point("coordinate2")?,
            },
            ActionType::Type => Action::Type { text: p.text("text")? },
            ActionType::ClearText => Action::ClearText,
            ActionType::SystemButton => {
                let raw = p.text("button")?;
                let button = raw.parse().map_err(|reason| ActionError::InvalidParameter {
                    action_type,
                    param: "button",
                    reason,
                })?;
                Action::SystemButton { button }
            }
            ActionType::Open => Action::Open { text: p.text("text")? },
            ActionType::Wait => Action::Wait { time: p.number("time")? },
            ActionType::TakeNote => Action::TakeNote { text: p.text("text")? },
            ActionType::Answer => Action::Answer { text: p.text("text")? },
            ActionType::Terminate => {
                let status = match p.text("status")?.to_ascii_lowercase().as_str() {
                    "success" => TerminateStatus::Success,
                    "failure" => TerminateStatus::Failure,
                    other => {
                        return Err(ActionError::InvalidParameter {
                            action_type,
                            param: "status",
                            reason: format!("expected success or failure, got `{other}`"),
                        })
                    }
                };
                Action::Terminate { status }
            }
        })
    }
}

/// Parse a raw action object and check it against the screen in one go.
pub fn validate_action(raw: &Value, width: u32, height: u32) -> Result<Action, ActionError> {
    let action = Action::from_value(raw)?;
    action.validate(width, height)?;
    Ok(action)
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_canonical())
    }
}

impl FromStr for Action {
    type Err = ActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Action::parse(s)
    }
}

struct Params<'a> {
    obj: &'a Map<String, Value>,
    action_type: ActionType,
}

impl Params<'_> {
    fn get(&self, param: &'static str) -> Result<&Value, ActionError> {
        self.obj
            .get(param)
            .ok_or(ActionError::MissingParameter { action_type: self.action_type, param })
    }

    fn invalid(&self, param: &'static str, reason: &str) -> ActionError {
        ActionError::InvalidParameter {
            action_type: self.action_type,
            param,
            reason: reason.to_string(),
        }
    }

    fn text(&self, param: &'static str) -> Result<String, ActionError> {
        self.get(param)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.invalid(param, "expected a string"))
    }

    fn number(&self, param: &'static str) -> Result<f64, ActionError> {
        self.get(param)?.as_f64().ok_or_else(|| self.invalid(param, "expected a number"))
    }

    fn point(&self, param: &'static str) -> Result<Point, ActionError> {
        let arr = self
            .get(param)?
            .as_array()
            .filter(|a| a.len() == 2)
            .ok_or_else(|| self.invalid(param, "expected [x, y]"))?;
        let coord = |v: &Value| {
            v.as_u64()
                .and_then(|n| u32::try_from(n).ok())
                .ok_or_else(|| self.invalid(param, "coordinates must be non-negative integers"))
        };
        Ok(Point::new(coord(&arr[0])?, coord(&arr[1])?))
    }
}

/// Seconds render as integers when integral so `2` stays `2`, not `2.0`.
fn serialize_time<M: SerializeMap>(map: &mut M, time: f64) -> Result<(), M::Error> {
    if time.fract() == 0.0 && time.abs() < 1e15 {
        map.serialize_entry("time", &(time as i64))
    } else {
        map.serialize_entry("time", &time)
    }
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(None)?;
        map.serialize_entry("action_type", self.action_type().as_str())?;
        match self {
            Action::Key { text }
            | Action::Type { text }
            | Action::Open { text }
            | Action::TakeNote { text }
            | Action::Answer { text } => map.serialize_entry("text", text)?,
            Action::Click { coordinate } => map.serialize_entry("coordinate", coordinate)?,
            Action::LongPress { coordinate, time } => {
                map.serialize_entry("coordinate", coordinate)?;
                serialize_time(&mut map, *time)?;
            }
            Action::Swipe { coordinate, coordinate2 } => {
                map.serialize_entry("coordinate", coordinate)?;
                map.serialize_entry("coordinate2", coordinate2)?;
            }
            Action::ClearText => {}
            Action::SystemButton { button } => map.serialize_entry("button", button.as_str())?,
            Action::Wait { time } => serialize_time(&mut map, *time)?,
            Action::Terminate { status } => map.serialize_entry("status", status.as_str())?,
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        Action::from_value(&value).map_err(serde::de::Error::custom)
    }
}

/// Compact JSON with a space after every `,` and `:`.
struct SpacedFormatter;

impl serde_json::ser::Formatter for SpacedFormatter {
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if first {
            Ok(())
        } else {
            w.write_all(b", ")
        }
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if first {
            Ok(())
        } else {
            w.write_all(b", ")
        }
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        w.write_all(b": ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn canonical_swipe_is_bit_exact() {
        let a = Action::Swipe { coordinate: Point::new(120, 400), coordinate2: Point::new(120, 1200) };
        assert_eq!(
            a.to_canonical(),
            r#"{"action_type": "swipe", "coordinate": [120, 400], "coordinate2": [120, 1200]}"#
        );
    }

    #[test]
    fn canonical_forms_per_type() {
        assert_eq!(Action::ClearText.to_canonical(), r#"{"action_type": "clear_text"}"#);
        assert_eq!(
            Action::LongPress { coordinate: Point::new(5, 6), time: 2.0 }.to_canonical(),
            r#"{"action_type": "long_press", "coordinate": [5, 6], "time": 2}"#
        );
        assert_eq!(
            Action::Wait { time: 0.5 }.to_canonical(),
            r#"{"action_type": "wait", "time": 0.5}"#
        );
        assert_eq!(
            Action::SystemButton { button: SystemButton::Back }.to_canonical(),
            r#"{"action_type": "system_button", "button": "Back"}"#
        );
        assert_eq!(
            Action::Terminate { status: TerminateStatus::Success }.to_canonical(),
            r#"{"action_type": "terminate", "status": "success"}"#
        );
    }

    #[test]
    fn click_inside_screen_is_ok() {
        let a = validate_action(&json!({"action_type": "click", "coordinate": [540, 1200]}), 1080, 2400);
        assert_eq!(a, Ok(Action::Click { coordinate: Point::new(540, 1200) }));
    }

    #[test]
    fn click_on_right_edge_is_out_of_bounds() {
        let err = validate_action(&json!({"action_type": "click", "coordinate": [1080, 10]}), 1080, 2400)
            .unwrap_err();
        assert!(matches!(err, ActionError::OutOfBounds { x: 1080, y: 10, .. }));
    }

    #[test]
    fn swipe_without_end_is_missing_parameter() {
        let err = validate_action(&json!({"action_type": "swipe", "coordinate": [1, 1]}), 100, 100)
            .unwrap_err();
        assert_eq!(
            err,
            ActionError::MissingParameter { action_type: ActionType::Swipe, param: "coordinate2" }
        );
    }

    #[test]
    fn unknown_type_and_bad_params() {
        assert_eq!(
            Action::parse(r#"{"action_type": "fly"}"#),
            Err(ActionError::UnknownActionType("fly".into()))
        );
        assert!(matches!(
            Action::parse(r#"{"action_type": "click", "coordinate": [-1, 3]}"#),
            Err(ActionError::InvalidParameter { param: "coordinate", .. })
        ));
        assert!(matches!(
            Action::parse(r#"{"action_type": "clear_text", "text": "x"}"#),
            Err(ActionError::UnexpectedParameter { .. })
        ));
        assert!(matches!(
            Action::parse(r#"{"action_type": "wait", "time": 0}"#).unwrap().validate(10, 10),
            Err(ActionError::InvalidParameter { param: "time", .. })
        ));
    }

    #[test]
    fn equality_is_structural() {
        let a = Action::Click { coordinate: Point::new(10, 10) };
        assert!(action_equals(&a, &Action::Click { coordinate: Point::new(10, 10) }));
        assert!(!action_equals(&a, &Action::Click { coordinate: Point::new(10, 11) }));
    }

    fn arb_point() -> impl Strategy<Value = Point> {
        (0u32..5000, 0u32..5000).prop_map(|(x, y)| Point::new(x, y))
    }

    fn arb_time() -> impl Strategy<Value = f64> {
        prop_oneof![(1u32..600).prop_map(f64::from), (0.001f64..600.0)]
    }

    pub(crate) fn arb_action() -> impl Strategy<Value = Action> {
        let text = ".{0,24}";
        prop_oneof![
            text.prop_map(|text| Action::Key { text }),
            arb_point().prop_map(|coordinate| Action::Click { coordinate }),
            (arb_point(), arb_time()).prop_map(|(coordinate, time)| Action::LongPress { coordinate, time }),
            (arb_point(), arb_point())
                .prop_map(|(coordinate, coordinate2)| Action::Swipe { coordinate, coordinate2 }),
            text.prop_map(|text| Action::Type { text }),
            Just(Action::ClearText),
            prop_oneof![
                Just(SystemButton::Back),
                Just(SystemButton::Home),
                Just(SystemButton::Menu),
                Just(SystemButton::Enter)
            ]
            .prop_map(|button| Action::SystemButton { button }),
            text.prop_map(|text| Action::Open { text }),
            arb_time().prop_map(|time| Action::Wait { time }),
            text.prop_map(|text| Action::TakeNote { text }),
            text.prop_map(|text| Action::Answer { text }),
            prop_oneof![Just(TerminateStatus::Success), Just(TerminateStatus::Failure)]
                .prop_map(|status| Action::Terminate { status }),
        ]
    }

    proptest! {
        #[test]
        fn render_then_parse_round_trips(action in arb_action()) {
            let rendered = action.to_canonical();
            prop_assert!(!rendered.contains('\n'));
            prop_assert_eq!(Action::parse(&rendered).unwrap(), action);
        }
    }
}

//! Android devices driven through the `adb` command line.

use std::collections::HashMap;
use std::process::Command;
use std::time::{Duration, Instant};

use super::{Backend, Device, DeviceError, DeviceInfo, ExecReport};
use crate::domain::{Action, Screenshot, SystemButton};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommandOutput {
    pub success: bool,
    pub stdout: Vec<u8>,
    pub stderr: String,
}

/// Runs one external command. Swapped out in tests.
pub trait CommandRunner: Send {
    fn run(&mut self, argv: &[String]) -> std::io::Result<CommandOutput>;
}

#[derive(Debug, Default)]
pub struct SystemRunner;

impl CommandRunner for SystemRunner {
    fn run(&mut self, argv: &[String]) -> std::io::Result<CommandOutput> {
        let out = Command::new(&argv[0]).args(&argv[1..]).output()?;
        Ok(CommandOutput {
            success: out.status.success(),
            stdout: out.stdout,
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        })
    }
}

/// Key names accepted by the `key` action. Also accepted: `KEYCODE_*` names
/// and bare integers, which pass through unchanged.
const KEYCODES: &[(&str, u32)] = &[
    ("home", 3),
    ("back", 4),
    ("call", 5),
    ("endcall", 6),
    ("dpad_up", 19),
    ("dpad_down", 20),
    ("dpad_left", 21),
    ("dpad_right", 22),
    ("dpad_center", 23),
    ("volume_up", 24),
    ("volume_down", 25),
    ("power", 26),
    ("camera", 27),
    ("clear", 28),
    ("tab", 61),
    ("space", 62),
    ("enter", 66),
    ("del", 67),
    ("delete", 67),
    ("backspace", 67),
    ("menu", 82),
    ("search", 84),
    ("media_play_pause", 85),
    ("page_up", 92),
    ("page_down", 93),
    ("escape", 111),
    ("forward_del", 112),
    ("move_home", 122),
    ("move_end", 123),
    ("volume_mute", 164),
    ("mute", 164),
    ("app_switch", 187),
    ("recent", 187),
    ("brightness_down", 220),
    ("brightness_up", 221),
    ("sleep", 223),
    ("wakeup", 224),
];

const KEYCODE_MOVE_END: u32 = 123;
const KEYCODE_DEL: u32 = 67;
/// Deletes issued by `clear_text`; fields longer than this need two clears.
pub const CLEAR_TEXT_DELETES: usize = 64;

pub fn keycode(name: &str) -> Option<String> {
    let lower = name.trim().to_ascii_lowercase();
    if lower.is_empty() {
        return None;
    }
    if lower.bytes().all(|b| b.is_ascii_digit()) {
        return Some(lower);
    }
    if let Some(rest) = lower.strip_prefix("keycode_") {
        if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_') {
            return Some(name.trim().to_ascii_uppercase());
        }
        return None;
    }
    KEYCODES.iter().find(|(k, _)| *k == lower).map(|(_, code)| code.to_string())
}

pub fn button_keycode(button: SystemButton) -> u32 {
    match button {
        SystemButton::Back => 4,
        SystemButton::Home => 3,
        SystemButton::Menu => 82,
        SystemButton::Enter => 66,
    }
}

/// Pieces of a `type` action: literal runs for `input text` and keyevents for
/// characters the shell cannot carry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TextChunk {
    Text(String),
    Key(u32),
}

/// Splits `text` into escaped `input text` arguments and keyevents. Non-ASCII
/// input is refused since `input text` cannot deliver it.
pub fn escape_text(text: &str) -> Result<Vec<TextChunk>, char> {
    let mut chunks = Vec::new();
    let mut run = String::new();
    for c in text.chars() {
        let key = match c {
            '\n' => Some(66),
            '\t' => Some(61),
            _ => None,
        };
        if let Some(code) = key {
            if !run.is_empty() {
                chunks.push(TextChunk::Text(std::mem::take(&mut run)));
            }
            chunks.push(TextChunk::Key(code));
            continue;
        }
        if !c.is_ascii() || c.is_ascii_control() {
            return Err(c);
        }
        match c {
            ' ' => run.push_str("%s"),
            '\\' | '\'' | '"' | '(' | ')' | '&' | '<' | '>' | ';' | '|' | '*' | '~' | '$' | '`'
            | '!' | '?' | '[' | ']' | '{' | '}' | '#' | '%' => {
                run.push('\\');
                run.push(c);
            }
            _ => run.push(c),
        }
    }
    if !run.is_empty() {
        chunks.push(TextChunk::Text(run));
    }
    Ok(chunks)
}

pub struct AdbDevice<R: CommandRunner = SystemRunner> {
    runner: R,
    info: DeviceInfo,
    packages: HashMap<String, String>,
    started: Instant,
    captures: usize,
}

impl<R: CommandRunner> AdbDevice<R> {
    /// Connects to `serial`, learning the screen size from a first capture.
    /// `packages` maps app names (any case) to package ids for `open`.
    pub fn connect(
        serial: impl Into<String>,
        runner: R,
        packages: HashMap<String, String>,
    ) -> Result<Self, DeviceError> {
        let packages = packages.into_iter().map(|(k, v)| (k.to_lowercase(), v)).collect();
        let mut dev = Self {
            runner,
            info: DeviceInfo { width: 0, height: 0, device_id: serial.into(), backend: Backend::Adb },
            packages,
            started: Instant::now(),
            captures: 0,
        };
        let shot = dev.capture()?;
        dev.info.width = shot.width();
        dev.info.height = shot.height();
        Ok(dev)
    }

    fn argv(&self, tail: &[&str]) -> Vec<String> {
        let mut argv = vec!["adb".to_string(), "-s".to_string(), self.info.device_id.clone()];
        argv.extend(tail.iter().map(|s| s.to_string()));
        argv
    }

    fn shell(&mut self, tail: &[&str]) -> Result<CommandOutput, DeviceError> {
        let mut full = vec!["shell"];
        full.extend_from_slice(tail);
        self.run(&full)
    }

    fn run(&mut self, tail: &[&str]) -> Result<CommandOutput, DeviceError> {
        let argv = self.argv(tail);
        tracing::debug!(command = %argv.join(" "), "adb");
        let out = self
            .runner
            .run(&argv)
            .map_err(|e| DeviceError::Disconnected(format!("cannot run adb: {e}")))?;
        if out.success {
            return Ok(out);
        }
        let err = out.stderr.to_lowercase();
        if ["not found", "no devices", "offline", "unauthorized", "device still connecting"]
            .iter()
            .any(|m| err.contains(m))
        {
            Err(DeviceError::Disconnected(out.stderr.trim().to_string()))
        } else {
            Err(DeviceError::Command(format!("{}: {}", argv.join(" "), out.stderr.trim())))
        }
    }

    fn package_for(&self, app: &str) -> Option<String> {
        let key = app.trim().to_lowercase();
        self.packages.get(&key).cloned().or_else(|| {
            // Already a package id.
            (key.contains('.') && !key.contains(char::is_whitespace)).then(|| app.trim().to_string())
        })
    }
}

impl<R: CommandRunner> Device for AdbDevice<R> {
    fn info(&self) -> &DeviceInfo {
        &self.info
    }

    fn capture(&mut self) -> Result<Screenshot, DeviceError> {
        let out = self.run(&["exec-out", "screencap", "-p"])?;
        if out.stdout.is_empty() {
            return Err(DeviceError::CaptureDecode("empty capture".into()));
        }
        let shot = Screenshot::from_png(&out.stdout)
            .map_err(|e| DeviceError::CaptureDecode(e.to_string()))?;
        self.captures += 1;
        let at = self.started.elapsed().as_millis() as u64;
        Ok(shot.with_meta(at, self.captures - 1))
    }

    fn execute(&mut self, action: &Action) -> Result<ExecReport, DeviceError> {
        if let Err(e) = action.validate(self.info.width, self.info.height) {
            return Ok(ExecReport::Rejected(e.to_string()));
        }
        match action {
            Action::Click { coordinate: p } => {
                self.shell(&["input", "tap", &p.x.to_string(), &p.y.to_string()])?;
            }
            Action::LongPress { coordinate: p, time } => {
                let (x, y) = (p.x.to_string(), p.y.to_string());
                let ms = ((time * 1000.0).round() as u64).max(1).to_string();
                self.shell(&["input", "swipe", &x, &y, &x, &y, &ms])?;
            }
            Action::Swipe { coordinate: a, coordinate2: b } => {
                let args = [a.x, a.y, b.x, b.y].map(|v| v.to_string());
                self.shell(&["input", "swipe", &args[0], &args[1], &args[2], &args[3], "300"])?;
            }
            Action::Type { text } => {
                let chunks = match escape_text(text) {
                    Ok(c) => c,
                    Err(c) => return Ok(ExecReport::Rejected(format!("cannot type {c:?} over adb"))),
                };
                for chunk in chunks {
                    match chunk {
                        TextChunk::Text(t) => self.shell(&["input", "text", &t])?,
                        TextChunk::Key(k) => self.shell(&["input", "keyevent", &k.to_string()])?,
                    };
                }
            }
            Action::ClearText => {
                self.shell(&["input", "keyevent", &KEYCODE_MOVE_END.to_string()])?;
                let del = KEYCODE_DEL.to_string();
                let mut args = vec!["input", "keyevent"];
                args.extend(std::iter::repeat_n(del.as_str(), CLEAR_TEXT_DELETES));
                self.shell(&args)?;
            }
            Action::Key { text } => {
                let Some(code) = keycode(text) else {
                    return Ok(ExecReport::Rejected(format!("unknown key `{text}`")));
                };
                self.shell(&["input", "keyevent", &code])?;
            }
            Action::SystemButton { button } => {
                self.shell(&["input", "keyevent", &button_keycode(*button).to_string()])?;
            }
            Action::Open { text } => {
                let package = self.package_for(text).ok_or_else(|| DeviceError::UnknownApp(text.clone()))?;
                self.shell(&["monkey", "-p", &package, "-c", "android.intent.category.LAUNCHER", "1"])?;
            }
            Action::Wait { time } => std::thread::sleep(Duration::from_secs_f64(*time)),
            Action::TakeNote { .. } | Action::Answer { .. } | Action::Terminate { .. } => {
                return Ok(ExecReport::NoEffect)
            }
        }
        Ok(ExecReport::Applied)
    }
}

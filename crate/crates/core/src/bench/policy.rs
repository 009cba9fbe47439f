//! A deterministic stand-in for the model that follows a task plan, makes
//! one scripted mistake, and judges steps with knowledge of that mistake.
//!
//! The policy only recovers when a reflector's explanation actually shows up
//! in the operator prompt, so recovery exercises the real feedback path.

use std::collections::VecDeque;
use std::sync::Mutex;

use crate::domain::{Action, TerminateStatus};
use crate::gateway::{ChatBackend, ChatRequest, Completion, GatewayError};

use super::{BenchTask, FaultKind};

/// Confidence of an ordinary planned action.
pub const CONFIDENT: f64 = -0.0002;
/// Confidence of a repeated ineffective action; the operator is sure of it.
pub const STUCK_CONFIDENCE: f64 = -0.0004;

const MODEL_ID: &str = "bench-policy";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Plan,
    AfterSlip,
    Stuck,
    AfterPremature,
}

#[derive(Debug)]
struct State {
    cursor: usize,
    fault_used: bool,
    mode: Mode,
    queue: VecDeque<Action>,
    operator_calls: usize,
    /// The most recent operator action was the slip and is not yet judged.
    slip_pending: bool,
}

pub struct PolicyBackend {
    task: BenchTask,
    state: Mutex<State>,
}

impl PolicyBackend {
    pub fn new(task: BenchTask) -> Self {
        Self {
            task,
            state: Mutex::new(State {
                cursor: 0,
                fault_used: false,
                mode: Mode::Plan,
                queue: VecDeque::new(),
                operator_calls: 0,
                slip_pending: false,
            }),
        }
    }

    fn operator(&self, prompt: &str) -> (Action, f64) {
        let mut st = self.state.lock().unwrap();
        st.operator_calls += 1;
        st.slip_pending = false;
        let fault = self.task.fault.as_ref();
        let heard = fault.is_some_and(|f| prompt.contains(&f.explanation));
        match st.mode {
            Mode::Plan => {}
            Mode::AfterSlip => {
                let f = fault.expect("slip mode implies a fault");
                st.mode = Mode::Plan;
                if heard {
                    st.queue = f.recovery.iter().cloned().collect();
                    st.cursor = f.resume;
                } else {
                    st.cursor = f.believed;
                }
            }
            Mode::Stuck => {
                let f = fault.expect("stuck mode implies a fault");
                if !heard {
                    return (f.action.clone().expect("validated"), STUCK_CONFIDENCE);
                }
                st.mode = Mode::Plan;
                st.queue = f.recovery.iter().cloned().collect();
                st.cursor = f.resume;
            }
            Mode::AfterPremature => {
                st.mode = Mode::Plan;
                st.cursor = fault.expect("premature mode implies a fault").at;
            }
        }
        if let Some(a) = st.queue.pop_front() {
            return (a, CONFIDENT);
        }
        if let Some(f) = fault.filter(|f| !st.fault_used && st.cursor == f.at) {
            st.fault_used = true;
            match f.kind {
                FaultKind::ActionSlip => {
                    st.mode = Mode::AfterSlip;
                    st.slip_pending = true;
                    return (f.action.clone().expect("validated"), f.confidence());
                }
                FaultKind::Stuck => {
                    st.mode = Mode::Stuck;
                    return (f.action.clone().expect("validated"), STUCK_CONFIDENCE);
                }
                FaultKind::PrematureTerminate => {
                    st.mode = Mode::AfterPremature;
                    return (Action::Terminate { status: TerminateStatus::Success }, CONFIDENT);
                }
                FaultKind::WrongAnswer => {
                    st.cursor += 1;
                    return (f.action.clone().expect("validated"), f.confidence());
                }
            }
        }
        let plan = &self.task.plan;
        let action = plan[st.cursor.min(plan.len() - 1)].clone();
        st.cursor = (st.cursor + 1).min(plan.len() - 1);
        (action, CONFIDENT)
    }

    fn verdict(&self, role: &str) -> String {
        let st = self.state.lock().unwrap();
        let fault = self.task.fault.as_ref();
        let negative = match role {
            "action_reflector" => st.slip_pending,
            "trajectory_reflector" => st.mode == Mode::Stuck,
            "global_reflector" => st.mode == Mode::AfterPremature,
            _ => false,
        };
        match fault {
            Some(f) if negative => {
                let word = if role == "global_reflector" { "INCOMPLETE" } else { "ERROR" };
                let mut reply = format!("VERDICT: {word}\n{}", f.explanation);
                if let Some(s) = &f.suggestion {
                    reply.push_str(&format!("\nSUGGESTION: {s}"));
                }
                reply
            }
            _ => "VERDICT: OK\nThe step matches the plan.".into(),
        }
    }
}

impl ChatBackend for PolicyBackend {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let tag = request.tag.as_deref().unwrap_or("");
        match tag {
            "operator" => {
                let (action, confidence) = self.operator(&request.full_text());
                let canonical = action.to_canonical();
                let text = format!(
                    "Thought: Following the plan for \"{}\".\nAction: {canonical}\nDescription: Perform {}.",
                    self.task.task,
                    action.action_type()
                );
                if request.want_logprobs {
                    Completion::with_token_logprobs(text.clone(), &[(text, confidence)], MODEL_ID)
                        .map_err(GatewayError::InvalidResponse)
                } else {
                    Ok(plain(text))
                }
            }
            "progressor" => {
                let calls = self.state.lock().unwrap().operator_calls;
                Ok(plain(format!("Progress: {calls} actions taken so far.")))
            }
            "action_reflector" | "trajectory_reflector" | "global_reflector" => Ok(plain(self.verdict(tag))),
            other => Err(GatewayError::ScriptMismatch(format!("bench policy has no reply for role `{other}`"))),
        }
    }

    fn model_id(&self) -> &str {
        MODEL_ID
    }
}

fn plain(text: String) -> Completion {
    Completion { text, tokens: Vec::new(), model_id: MODEL_ID.into(), usage: Default::default() }
}

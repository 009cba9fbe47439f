//! One line of text per trace record.

use deckhand_core::orchestrator::{RunEvent, TraceRecord};

fn short(text: &str, max: usize) -> String {
    let one_line = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if one_line.chars().count() <= max {
        return one_line;
    }
    let cut: String = one_line.chars().take(max.saturating_sub(3)).collect();
    format!("{cut}...")
}

/// `shot` maps a trace's relative screenshot name to what should be shown.
pub fn line(record: &TraceRecord, shot: &dyn Fn(&str) -> String) -> String {
    let body = match &record.event {
        RunEvent::RunStarted { instruction, app_hint, device, knowledge, max_steps, reflectors } => {
            let app = app_hint.as_deref().map(|a| format!(" [{a}]")).unwrap_or_default();
            format!(
                "run {} on {} {}x{}{app}: {instruction:?} (max {max_steps} steps, {} knowledge items, reflectors action={} trajectory={} global={})",
                record.run_id,
                device.device_id,
                device.width,
                device.height,
                knowledge.len(),
                reflectors.action,
                reflectors.trajectory,
                reflectors.global
            )
        }
        RunEvent::StepStarted { step, screenshot } => format!("step {step}  screen {}", shot(screenshot)),
        RunEvent::OperatorOutput { step, thought, action, description, confidence } => {
            let conf = confidence.map(|c| format!(" conf={c:.6}")).unwrap_or_default();
            format!("step {step}  action {action}{conf}  {}  (thought: {})", short(description, 80), short(thought, 80))
        }
        RunEvent::ConfidenceGated { step, reflect, confidence } => match confidence {
            Some(c) => format!("step {step}  gate conf={c:.6} reflect={reflect}"),
            None => format!("step {step}  gate no confidence reflect={reflect}"),
        },
        RunEvent::ActionExecuted { step, report, screenshot, changed_regions } => format!(
            "step {step}  executed: {report}  {} changed regions  screen {}",
            changed_regions.len(),
            shot(screenshot)
        ),
        RunEvent::Reflection { step, feedback, triggers } => {
            let why = if triggers.is_empty() {
                String::new()
            } else {
                let names: Vec<String> = triggers
                    .iter()
                    .map(|t| serde_json::to_value(t).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
                    .collect();
                format!(" [{}]", names.join(", "))
            };
            let hint = feedback.suggestion.as_deref().map(|s| format!(" suggestion: {}", short(s, 80))).unwrap_or_default();
            format!(
                "step {step}  {} reflection{why}: {} {}{hint}",
                format!("{:?}", feedback.level).to_lowercase(),
                feedback.verdict.as_str(),
                short(&feedback.explanation, 100)
            )
        }
        RunEvent::ProgressUpdated { step, progress } => {
            let answer = progress.answer.as_deref().map(|a| format!(" answer={a:?}")).unwrap_or_default();
            format!("step {step}  progress: {}{answer}", short(&progress.summary, 120))
        }
        RunEvent::TerminateIntercepted { step, status, verdict, accepted } => format!(
            "step {step}  terminate({}) judged {} -> {}",
            status.as_str(),
            verdict.as_str(),
            if *accepted { "accepted" } else { "continue" }
        ),
        RunEvent::RunFinished { status, answer, failure_label, steps } => {
            let answer = answer.as_deref().map(|a| format!(" answer={a:?}")).unwrap_or_default();
            let label = failure_label.map(|l| format!(" label={l:?}")).unwrap_or_default();
            format!("finished: {} after {steps} steps{answer}{label}", status.as_str())
        }
        RunEvent::Warning { step, message } => match step {
            Some(s) => format!("step {s}  warning: {message}"),
            None => format!("warning: {message}"),
        },
    };
    format!("{:>4} {body}", record.seq)
}

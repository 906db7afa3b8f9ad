//! Runtime switching state machine.
//!
//! A [`Session`] alternates generation between a large and a small
//! endpoint. The large model generates with the calibrated switch-cue
//! surfaces (plus `</think>`) as stop sequences; when a cue fires, the
//! continuation is delegated to the small model, which stops at sentence
//! punctuation and hands control back. Once either model emits
//! `</think>`, the answer stage belongs to the small model until
//! end-of-sequence or budget exhaustion.
//!
//! One session is strictly sequential; each turn depends on the previous
//! context. Sessions are independent of one another and clients must be
//! shareable across sessions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::calibration::SwitchCueSet;
use crate::client::{GenerateOptions, ModelClient, SamplingParams, StopReason};
use crate::error::{Error, Result};
use crate::trace::{Producer, TokenRecord};

/// Boundary token separating the reasoning stage from the answer stage.
pub const THINK_END: &str = "</think>";

/// Stop surfaces for small-model reasoning segments.
pub const SENTENCE_TERMINATORS: [&str; 4] = [".", "!", "?", "\n"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Reasoning,
    Answer,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SwitchDirection {
    LargeToSmall,
    SmallToLarge,
    ToAnswerStage,
}

/// Why a session reached the Done phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndCause {
    /// Natural end-of-sequence from the active model.
    Eos,
    /// Token budget exhausted. When this happens during reasoning the
    /// model never produced `</think>`; the transcript records it.
    Budget,
    /// Endpoint failure after retries; partial transcript retained.
    Aborted,
}

/// One handoff record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchEvent {
    /// Context index of the first token the incoming model will produce.
    pub at_position: usize,
    pub direction: SwitchDirection,
    /// Matched stop surface, or "sentence_end" / "budget".
    pub trigger: String,
    /// Tokens generated since the target model last held control; what it
    /// must ingest before its next turn.
    pub prefill_new_tokens: usize,
}

/// Token budgets for a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    /// Cap on generated context length.
    pub max_total_tokens: usize,
    /// Cap on one small-model reasoning segment; hitting it returns
    /// control to the large model with trigger "budget".
    pub max_small_segment_tokens: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            max_total_tokens: 32_768,
            max_small_segment_tokens: 128,
        }
    }
}

/// A generated token attributed to its producer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributedToken {
    #[serde(flatten)]
    pub record: TokenRecord,
    pub producer: Producer,
}

/// What the orchestrator asks a model to do next.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnRequest {
    pub model: Producer,
    pub stop_surfaces: Vec<String>,
    pub max_tokens: usize,
    pub sampling: SamplingParams,
}

/// A finished generation turn, ready to fold into the session.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedTurn {
    pub model: Producer,
    pub emitted: Vec<TokenRecord>,
    pub stop_reason: StopReason,
}

/// The live switching state machine.
#[derive(Debug, Clone)]
pub struct Session {
    pub prompt: String,
    pub context: Vec<AttributedToken>,
    pub phase: Phase,
    pub active_model: Producer,
    pub events: Vec<SwitchEvent>,
    pub budgets: Budgets,
    /// Calibrated large-model stop surfaces, sorted for deterministic
    /// request construction.
    pub cue_surfaces: Vec<String>,
    pub sampling: SamplingParams,
    /// Prompt length in tokens, as reported by the first turn's usage.
    /// Counted into each model's first prefill.
    pub prompt_token_count: usize,
    pub ended_by: Option<EndCause>,
    /// Prompt-plus-context tokens each model has ingested or produced.
    known: BTreeMap<Producer, usize>,
    /// Sum of per-turn prefill counts, per model.
    prefill_totals: BTreeMap<Producer, usize>,
    turns: usize,
}

/// Start a session: generation begins with the large model in the
/// reasoning phase. An empty cue set is valid degenerate mode — only
/// `</think>` can then trigger a switch.
pub fn start_session(prompt: &str, cue_set: &SwitchCueSet, budgets: Budgets) -> Result<Session> {
    if prompt.is_empty() {
        return Err(Error::BadRequest("empty prompt".into()));
    }
    if budgets.max_total_tokens == 0 {
        return Err(Error::BadRequest("max_total_tokens must be >= 1".into()));
    }
    if budgets.max_small_segment_tokens == 0 {
        return Err(Error::BadRequest(
            "max_small_segment_tokens must be >= 1".into(),
        ));
    }
    Ok(Session {
        prompt: prompt.to_string(),
        context: Vec::new(),
        phase: Phase::Reasoning,
        active_model: Producer::Large,
        events: Vec::new(),
        budgets,
        cue_surfaces: cue_set.surfaces.iter().cloned().collect(),
        sampling: SamplingParams::default(),
        prompt_token_count: 0,
        ended_by: None,
        known: BTreeMap::new(),
        prefill_totals: BTreeMap::new(),
        turns: 0,
    })
}

impl Session {
    pub fn with_sampling(mut self, sampling: SamplingParams) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn context_len(&self) -> usize {
        self.context.len()
    }

    pub fn context_text(&self) -> String {
        self.context.iter().map(|t| t.record.text.as_str()).collect()
    }

    /// Full text the next turn must condition on.
    pub fn full_text(&self) -> String {
        let mut text = self.prompt.clone();
        text.push_str(&self.context_text());
        text
    }

    pub fn remaining_budget(&self) -> usize {
        self.budgets.max_total_tokens.saturating_sub(self.context.len())
    }

    /// Tokens `target_model` must ingest before its next turn: everything
    /// appended (prompt included) since it last produced or prefilled.
    pub fn prefill_accounting(&self, target_model: Producer) -> usize {
        let universe = self.prompt_token_count + self.context.len();
        universe - self.known.get(&target_model).copied().unwrap_or(0)
    }

    /// Sum of actual per-turn prefills for a model.
    pub fn prefill_total(&self, model: Producer) -> usize {
        self.prefill_totals.get(&model).copied().unwrap_or(0)
    }

    pub fn produced_total(&self, model: Producer) -> usize {
        self.context.iter().filter(|t| t.producer == model).count()
    }

    pub fn turns(&self) -> usize {
        self.turns
    }

    /// Build the next generation request.
    ///
    /// Large reasoning turns stop on the cue surfaces plus `</think>`;
    /// small reasoning turns stop on sentence terminators plus
    /// `</think>` and are capped by the segment budget; answer turns run
    /// uninterrupted to end-of-sequence or budget.
    pub fn next_turn_request(&self) -> Result<TurnRequest> {
        if self.phase == Phase::Done {
            return Err(Error::SessionClosed);
        }
        let remaining = self.remaining_budget();
        if remaining == 0 {
            return Err(Error::SessionClosed);
        }
        let (stop_surfaces, max_tokens) = match (self.active_model, self.phase) {
            (Producer::Large, Phase::Reasoning) => {
                let mut stops = self.cue_surfaces.clone();
                stops.push(THINK_END.to_string());
                (stops, remaining)
            }
            (Producer::Small, Phase::Reasoning) => {
                let mut stops: Vec<String> =
                    SENTENCE_TERMINATORS.iter().map(|s| s.to_string()).collect();
                stops.push(THINK_END.to_string());
                (stops, remaining.min(self.budgets.max_small_segment_tokens))
            }
            (Producer::Small, Phase::Answer) => (Vec::new(), remaining),
            (Producer::Large, Phase::Answer) => {
                return Err(Error::ProtocolViolation(
                    "answer phase belongs to the small model".into(),
                ))
            }
            (_, Phase::Done) => unreachable!("handled above"),
        };
        Ok(TurnRequest {
            model: self.active_model,
            stop_surfaces,
            max_tokens,
            sampling: self.sampling,
        })
    }

    /// Fold a completed turn into the session and transition.
    ///
    /// The emitted tokens (which include the matched stop surface — the
    /// cue text is part of the discourse) are appended with the producer
    /// tag, then the state machine advances:
    ///
    /// - large stopped on a cue surface → delegate to small;
    /// - either model stopped on `</think>` → answer stage, small model;
    /// - small stopped on a sentence terminator during reasoning →
    ///   control returns to large;
    /// - small hit its segment cap during reasoning → back to large with
    ///   trigger "budget";
    /// - end-of-sequence, or the total budget filling up → Done.
    ///
    /// Validation happens before any mutation, so a rejected turn leaves
    /// the session untouched.
    pub fn apply_turn(&mut self, turn: &CompletedTurn) -> Result<()> {
        if self.phase == Phase::Done {
            return Err(Error::SessionClosed);
        }
        if turn.model != self.active_model {
            return Err(Error::ProtocolViolation(format!(
                "turn by {} but {} is active",
                turn.model, self.active_model
            )));
        }
        if self.phase == Phase::Answer && turn.model == Producer::Large {
            return Err(Error::ProtocolViolation(
                "large model cannot take a turn in the answer phase".into(),
            ));
        }
        if let StopReason::StopSurface(surface) = &turn.stop_reason {
            self.validate_stop_surface(turn.model, surface)?;
        }

        // Turn accounting: what this model had to ingest before producing.
        let universe = self.prompt_token_count + self.context.len();
        let known = self.known.entry(turn.model).or_insert(0);
        *self.prefill_totals.entry(turn.model).or_insert(0) += universe - *known;
        *known = universe;
        self.turns += 1;

        let capacity = self.budgets.max_total_tokens - self.context.len();
        let truncated = turn.emitted.len() > capacity;
        let take = turn.emitted.len().min(capacity);
        for record in &turn.emitted[..take] {
            let mut record = record.clone();
            record.position = self.context.len();
            self.context.push(AttributedToken {
                record,
                producer: turn.model,
            });
        }
        *self.known.get_mut(&turn.model).expect("inserted above") += take;

        if truncated {
            self.finish(EndCause::Budget);
            return Ok(());
        }

        match &turn.stop_reason {
            StopReason::StopSurface(surface) if surface == THINK_END => {
                self.phase = Phase::Answer;
                self.active_model = Producer::Small;
                self.push_event(SwitchDirection::ToAnswerStage, THINK_END, Producer::Small);
            }
            StopReason::StopSurface(surface) => match turn.model {
                Producer::Large => {
                    self.active_model = Producer::Small;
                    self.push_event(SwitchDirection::LargeToSmall, surface, Producer::Small);
                }
                Producer::Small => {
                    self.active_model = Producer::Large;
                    self.push_event(SwitchDirection::SmallToLarge, "sentence_end", Producer::Large);
                }
            },
            StopReason::MaxTokens => {
                if self.remaining_budget() == 0 {
                    self.finish(EndCause::Budget);
                } else if self.phase == Phase::Reasoning && turn.model == Producer::Small {
                    // Segment cap: runaway small segment with no terminator.
                    self.active_model = Producer::Large;
                    self.push_event(SwitchDirection::SmallToLarge, "budget", Producer::Large);
                } else {
                    self.finish(EndCause::Budget);
                }
            }
            StopReason::EndOfSequence => {
                self.finish(EndCause::Eos);
            }
        }

        if self.phase != Phase::Done && self.remaining_budget() == 0 {
            self.finish(EndCause::Budget);
        }
        Ok(())
    }

    /// A reported stop surface must belong to the stop set this model was
    /// configured with: cues are large-model stop conditions only, and
    /// sentence terminators stop only small reasoning segments.
    fn validate_stop_surface(&self, model: Producer, surface: &str) -> Result<()> {
        if self.phase == Phase::Answer {
            return Err(Error::ProtocolViolation(format!(
                "stop surface {surface:?} reported in the answer phase, which has no stop set"
            )));
        }
        if surface == THINK_END {
            return Ok(());
        }
        let legal = match model {
            Producer::Large => self.cue_surfaces.iter().any(|s| s == surface),
            Producer::Small => SENTENCE_TERMINATORS.contains(&surface),
        };
        if legal {
            Ok(())
        } else {
            Err(Error::ProtocolViolation(format!(
                "stop surface {surface:?} is not in the {model} model's stop set"
            )))
        }
    }

    fn push_event(&mut self, direction: SwitchDirection, trigger: &str, target: Producer) {
        let prefill_new_tokens = self.prefill_accounting(target);
        self.events.push(SwitchEvent {
            at_position: self.context.len(),
            direction,
            trigger: trigger.to_string(),
            prefill_new_tokens,
        });
    }

    fn finish(&mut self, cause: EndCause) {
        if self.phase == Phase::Reasoning {
            warn!(
                cause = ?cause,
                context_len = self.context.len(),
                "session ended during reasoning without reaching the answer stage"
            );
        }
        self.phase = Phase::Done;
        if self.ended_by.is_none() {
            self.ended_by = Some(cause);
        }
    }

    /// Freeze the session into a transcript.
    pub fn into_transcript(self, aborted: Option<String>) -> Transcript {
        let text = self.full_text();
        let stats = TranscriptStats {
            prompt_tokens: self.prompt_token_count,
            total_tokens: self.context.len(),
            large_tokens: self.produced_total(Producer::Large),
            small_tokens: self.produced_total(Producer::Small),
            turns: self.turns,
            phase_at_end: self.phase,
            ended_by: self.ended_by,
            aborted,
            prefill_tokens_by_model: [Producer::Large, Producer::Small]
                .into_iter()
                .map(|m| (m.to_string(), self.prefill_total(m)))
                .collect(),
            pending_prefill_by_model: [Producer::Large, Producer::Small]
                .into_iter()
                .map(|m| (m.to_string(), self.prefill_accounting(m)))
                .collect(),
        };
        Transcript {
            text,
            prompt: self.prompt,
            tokens: self.context,
            events: self.events,
            stats,
        }
    }
}

/// Final output of a session run: full text, per-token attribution, the
/// switch-event log, and accounting totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub text: String,
    pub prompt: String,
    pub tokens: Vec<AttributedToken>,
    pub events: Vec<SwitchEvent>,
    pub stats: TranscriptStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptStats {
    pub prompt_tokens: usize,
    pub total_tokens: usize,
    pub large_tokens: usize,
    pub small_tokens: usize,
    pub turns: usize,
    pub phase_at_end: Phase,
    pub ended_by: Option<EndCause>,
    /// Present when the run aborted on endpoint failure; the transcript
    /// is then partial.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
    pub prefill_tokens_by_model: BTreeMap<String, usize>,
    /// Unseen tokens per model at session end (what each model would
    /// still need to prefill).
    pub pending_prefill_by_model: BTreeMap<String, usize>,
}

impl Transcript {
    /// Producer of each generated token, in order.
    pub fn attribution(&self) -> Vec<Producer> {
        self.tokens.iter().map(|t| t.producer).collect()
    }

    pub fn generated_text(&self) -> String {
        self.tokens.iter().map(|t| t.record.text.as_str()).collect()
    }
}

/// Drive a session to completion against the two endpoints.
///
/// Endpoint failures (after the client's own retries) abort the run and
/// return the partial transcript with an aborted marker; state-machine
/// violations are hard errors.
pub fn run(
    mut session: Session,
    large_client: &dyn ModelClient,
    small_client: &dyn ModelClient,
) -> Result<Transcript> {
    while session.phase != Phase::Done {
        let request = session.next_turn_request()?;
        let client: &dyn ModelClient = match request.model {
            Producer::Large => large_client,
            Producer::Small => small_client,
        };
        let options = GenerateOptions {
            stop_surfaces: request.stop_surfaces.clone(),
            max_tokens: request.max_tokens,
            sampling: request.sampling,
        };
        let prompt_text = session.full_text();
        let result = match client.generate(&prompt_text, &options) {
            Ok(result) => result,
            Err(err) => {
                warn!(model = %request.model, error = %err, "aborting session");
                session.ended_by = Some(EndCause::Aborted);
                session.phase = Phase::Done;
                let marker = Error::AbortedSession(err.to_string()).to_string();
                return Ok(session.into_transcript(Some(marker)));
            }
        };
        if session.turns == 0 && session.prompt_token_count == 0 {
            // Prompt length in the serving layer's own token units,
            // measured once; all later accounting is in context tokens.
            session.prompt_token_count = result.usage.prompt_tokens;
        }
        session.apply_turn(&CompletedTurn {
            model: request.model,
            emitted: result.tokens,
            stop_reason: result.stop_reason,
        })?;
    }
    Ok(session.into_transcript(None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::SwitchCueSet;
    use crate::margin::MarginStats;
    use crate::mocksim::{MockBackend, MockClient, Script, ScriptToken};
    use std::sync::Arc;

    fn cue_set(surfaces: &[&str]) -> SwitchCueSet {
        SwitchCueSet {
            model_pair: ("large-m".into(), "small-m".into()),
            surfaces: surfaces.iter().map(|s| s.to_string()).collect(),
            selection_report: Vec::new(),
            global_stats: MarginStats {
                mean: 0.5,
                std_dev: 0.1,
                std_err: 0.01,
                n: 100,
            },
        }
    }

    fn record(text: &str, pos: usize) -> TokenRecord {
        TokenRecord::new(text, vec![(text.to_string(), 0.8), ("x".into(), 0.2)], pos)
    }

    fn turn(model: Producer, texts: &[&str], stop: StopReason) -> CompletedTurn {
        CompletedTurn {
            model,
            emitted: texts.iter().enumerate().map(|(i, t)| record(t, i)).collect(),
            stop_reason: stop,
        }
    }

    #[test]
    fn start_session_defaults() {
        let s = start_session("Solve x", &cue_set(&["Thus,"]), Budgets::default()).unwrap();
        assert_eq!(s.active_model, Producer::Large);
        assert_eq!(s.phase, Phase::Reasoning);
        assert!(s.context.is_empty());
    }

    #[test]
    fn start_session_empty_cues_is_degenerate_but_valid() {
        let s = start_session("Solve x", &cue_set(&[]), Budgets::default()).unwrap();
        let req = s.next_turn_request().unwrap();
        assert_eq!(req.stop_surfaces, vec![THINK_END.to_string()]);
    }

    #[test]
    fn start_session_rejects_bad_inputs() {
        assert!(matches!(
            start_session("", &cue_set(&[]), Budgets::default()).unwrap_err(),
            Error::BadRequest(_)
        ));
        let zero = Budgets {
            max_total_tokens: 0,
            ..Default::default()
        };
        assert!(matches!(
            start_session("x", &cue_set(&[]), zero).unwrap_err(),
            Error::BadRequest(_)
        ));
    }

    #[test]
    fn fresh_session_requests_large_with_cue_stops() {
        let s = start_session("p", &cue_set(&["Thus,", "Wait,"]), Budgets::default()).unwrap();
        let req = s.next_turn_request().unwrap();
        assert_eq!(req.model, Producer::Large);
        assert!(req.stop_surfaces.contains(&"Thus,".to_string()));
        assert!(req.stop_surfaces.contains(&THINK_END.to_string()));
        assert_eq!(req.max_tokens, 32_768);
    }

    #[test]
    fn small_reasoning_turn_stops_at_sentence_ends() {
        let mut s = start_session("p", &cue_set(&["Thus,"]), Budgets::default()).unwrap();
        s.apply_turn(&turn(
            Producer::Large,
            &["a", "Thus,"],
            StopReason::StopSurface("Thus,".into()),
        ))
        .unwrap();
        assert_eq!(s.active_model, Producer::Small);
        let req = s.next_turn_request().unwrap();
        for t in SENTENCE_TERMINATORS {
            assert!(req.stop_surfaces.contains(&t.to_string()));
        }
        assert!(req.stop_surfaces.contains(&THINK_END.to_string()));
        assert_eq!(req.max_tokens, 128);
    }

    #[test]
    fn answer_turn_has_no_stops() {
        let mut s = start_session("p", &cue_set(&["Thus,"]), Budgets::default()).unwrap();
        s.apply_turn(&turn(
            Producer::Large,
            &["a", THINK_END],
            StopReason::StopSurface(THINK_END.into()),
        ))
        .unwrap();
        assert_eq!(s.phase, Phase::Answer);
        let req = s.next_turn_request().unwrap();
        assert_eq!(req.model, Producer::Small);
        assert!(req.stop_surfaces.is_empty());
    }

    #[test]
    fn done_session_refuses_turns() {
        let mut s = start_session("p", &cue_set(&[]), Budgets::default()).unwrap();
        s.apply_turn(&turn(Producer::Large, &["a"], StopReason::EndOfSequence))
            .unwrap();
        assert_eq!(s.phase, Phase::Done);
        assert!(matches!(s.next_turn_request().unwrap_err(), Error::SessionClosed));
        assert!(matches!(
            s.apply_turn(&turn(Producer::Large, &["b"], StopReason::EndOfSequence))
                .unwrap_err(),
            Error::SessionClosed
        ));
    }

    #[test]
    fn cue_stop_delegates_and_keeps_surface_in_context() {
        let mut s = start_session("p", &cue_set(&["Thus,"]), Budgets::default()).unwrap();
        s.apply_turn(&turn(
            Producer::Large,
            &["x", " y", "Thus,"],
            StopReason::StopSurface("Thus,".into()),
        ))
        .unwrap();
        assert_eq!(s.active_model, Producer::Small);
        assert_eq!(s.phase, Phase::Reasoning);
        assert_eq!(s.context_text(), "x yThus,");
        assert_eq!(s.events.len(), 1);
        assert_eq!(s.events[0].direction, SwitchDirection::LargeToSmall);
        assert_eq!(s.events[0].trigger, "Thus,");
        assert_eq!(s.events[0].at_position, 3);
    }

    #[test]
    fn sentence_end_returns_control_to_large() {
        let mut s = start_session("p", &cue_set(&["Thus,"]), Budgets::default()).unwrap();
        s.apply_turn(&turn(
            Producer::Large,
            &["Thus,"],
            StopReason::StopSurface("Thus,".into()),
        ))
        .unwrap();
        s.apply_turn(&turn(
            Producer::Small,
            &[" it", " holds", "."],
            StopReason::StopSurface(".".into()),
        ))
        .unwrap();
        assert_eq!(s.active_model, Producer::Large);
        assert_eq!(s.phase, Phase::Reasoning);
        let last = s.events.last().unwrap();
        assert_eq!(last.direction, SwitchDirection::SmallToLarge);
        assert_eq!(last.trigger, "sentence_end");
    }

    #[test]
    fn small_think_end_enters_answer_stage_and_stays_small() {
        let mut s = start_session("p", &cue_set(&["Thus,"]), Budgets::default()).unwrap();
        s.apply_turn(&turn(
            Producer::Large,
            &["Thus,"],
            StopReason::StopSurface("Thus,".into()),
        ))
        .unwrap();
        s.apply_turn(&turn(
            Producer::Small,
            &[" done", THINK_END],
            StopReason::StopSurface(THINK_END.into()),
        ))
        .unwrap();
        assert_eq!(s.phase, Phase::Answer);
        assert_eq!(s.active_model, Producer::Small);
        assert_eq!(
            s.events.last().unwrap().direction,
            SwitchDirection::ToAnswerStage
        );
    }

    #[test]
    fn wrong_model_is_protocol_violation() {
        let mut s = start_session("p", &cue_set(&[]), Budgets::default()).unwrap();
        let err = s
            .apply_turn(&turn(Producer::Small, &["a"], StopReason::EndOfSequence))
            .unwrap_err();
        assert!(matches!(err, Error::ProtocolViolation(_)));
        assert!(s.context.is_empty(), "failed turn must not mutate");
    }

    #[test]
    fn small_cue_stop_is_protocol_violation() {
        let mut s = start_session("p", &cue_set(&["Thus,"]), Budgets::default()).unwrap();
        s.apply_turn(&turn(
            Producer::Large,
            &["Thus,"],
            StopReason::StopSurface("Thus,".into()),
        ))
        .unwrap();
        let err = s
            .apply_turn(&turn(
                Producer::Small,
                &["x"],
                StopReason::StopSurface("Thus,".into()),
            ))
            .unwrap_err();
        assert!(matches!(err, Error::ProtocolViolation(_)));
    }

    #[test]
    fn small_segment_cap_returns_to_large_with_budget_trigger() {
        let budgets = Budgets {
            max_total_tokens: 100,
            max_small_segment_tokens: 2,
        };
        let mut s = start_session("p", &cue_set(&["Thus,"]), budgets).unwrap();
        s.apply_turn(&turn(
            Producer::Large,
            &["Thus,"],
            StopReason::StopSurface("Thus,".into()),
        ))
        .unwrap();
        s.apply_turn(&turn(Producer::Small, &[" a", " b"], StopReason::MaxTokens))
            .unwrap();
        assert_eq!(s.active_model, Producer::Large);
        assert_eq!(s.phase, Phase::Reasoning);
        assert_eq!(s.events.last().unwrap().trigger, "budget");
    }

    #[test]
    fn budget_exhaustion_finishes_session() {
        let budgets = Budgets {
            max_total_tokens: 3,
            max_small_segment_tokens: 128,
        };
        let mut s = start_session("p", &cue_set(&[]), budgets).unwrap();
        s.apply_turn(&turn(Producer::Large, &["a", "b", "c"], StopReason::MaxTokens))
            .unwrap();
        assert_eq!(s.phase, Phase::Done);
        assert_eq!(s.ended_by, Some(EndCause::Budget));
        assert_eq!(s.context_len(), 3);
    }

    #[test]
    fn overlong_turn_is_truncated_to_budget() {
        let budgets = Budgets {
            max_total_tokens: 2,
            max_small_segment_tokens: 128,
        };
        let mut s = start_session("p", &cue_set(&[]), budgets).unwrap();
        s.apply_turn(&turn(
            Producer::Large,
            &["a", "b", "c", "d"],
            StopReason::EndOfSequence,
        ))
        .unwrap();
        assert_eq!(s.context_len(), 2);
        assert_eq!(s.phase, Phase::Done);
        assert_eq!(s.ended_by, Some(EndCause::Budget));
    }

    #[test]
    fn prefill_accounting_examples() {
        // First small turn after large produced 50 tokens on a 20-token
        // prompt: small must ingest 70.
        let budgets = Budgets {
            max_total_tokens: 1000,
            max_small_segment_tokens: 128,
        };
        let mut s = start_session("p", &cue_set(&["Thus,"]), budgets).unwrap();
        s.prompt_token_count = 20;
        let mut texts: Vec<String> = (0..49).map(|i| format!(" t{i}")).collect();
        texts.push("Thus,".into());
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        s.apply_turn(&turn(
            Producer::Large,
            &refs,
            StopReason::StopSurface("Thus,".into()),
        ))
        .unwrap();
        assert_eq!(s.prefill_accounting(Producer::Small), 70);
        assert_eq!(s.events.last().unwrap().prefill_new_tokens, 70);

        // Small emits 12 tokens and a terminator is the 12th; large must
        // ingest exactly those 12.
        let mut texts: Vec<String> = (0..11).map(|i| format!(" s{i}")).collect();
        texts.push(".".into());
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        s.apply_turn(&turn(
            Producer::Small,
            &refs,
            StopReason::StopSurface(".".into()),
        ))
        .unwrap();
        assert_eq!(s.prefill_accounting(Producer::Large), 12);

        // Same model twice in a row: nothing new to ingest.
        assert_eq!(s.prefill_accounting(Producer::Small), 0);
    }

    // ------------------------------------------------------------------
    // End-to-end runs against the in-process scripted backend
    // ------------------------------------------------------------------

    fn greedy(surface: &str) -> ScriptToken {
        ScriptToken::with_margin(surface, 0.6)
    }

    fn two_model_clients(surfaces: &[&str]) -> (MockClient, MockClient) {
        let tokens: Vec<ScriptToken> = surfaces.iter().map(|s| greedy(s)).collect();
        let backend = Arc::new(MockBackend::new(vec![
            Script::new("large-m", tokens.clone()),
            Script::new("small-m", tokens),
        ]));
        (
            MockClient::new(backend.clone(), "large-m"),
            MockClient::new(backend, "small-m"),
        )
    }

    #[test]
    fn run_immediate_think_end() {
        let (large, small) = two_model_clients(&["P", THINK_END, " ans", "!"]);
        let session = start_session("P", &cue_set(&["Thus,"]), Budgets::default()).unwrap();
        let transcript = run(session, &large, &small).unwrap();
        let directions: Vec<_> = transcript.events.iter().map(|e| e.direction).collect();
        assert_eq!(directions, vec![SwitchDirection::ToAnswerStage]);
        assert_eq!(transcript.stats.ended_by, Some(EndCause::Eos));
        let think_pos = transcript.events[0].at_position;
        for token in &transcript.tokens[think_pos..] {
            assert_eq!(token.producer, Producer::Small);
        }
        assert_eq!(transcript.text, "P</think> ans!");
    }

    #[test]
    fn run_two_cue_script_event_sequence() {
        let (large, small) = two_model_clients(&[
            "Solve: ", "We", " start", " carefully", "Thus,", " x", " equals", " four", ".",
            " Indeed", " more", " steps", " ", "Wait,", " then", " y", " too", ".", " Finally",
            " conclude", THINK_END, " The", " answer", " is", " 4", ".",
        ]);
        let session =
            start_session("Solve: ", &cue_set(&["Thus,", "Wait,"]), Budgets::default()).unwrap();
        let transcript = run(session, &large, &small).unwrap();
        let directions: Vec<_> = transcript.events.iter().map(|e| e.direction).collect();
        assert_eq!(
            directions,
            vec![
                SwitchDirection::LargeToSmall,
                SwitchDirection::SmallToLarge,
                SwitchDirection::LargeToSmall,
                SwitchDirection::SmallToLarge,
                SwitchDirection::ToAnswerStage,
            ]
        );
        assert_eq!(transcript.stats.ended_by, Some(EndCause::Eos));
        assert_eq!(transcript.stats.phase_at_end, Phase::Done);
        // Token attribution partition.
        assert_eq!(
            transcript.stats.large_tokens + transcript.stats.small_tokens,
            transcript.stats.total_tokens
        );
        // The full text is the script text.
        assert!(transcript.text.starts_with("Solve: We start carefullyThus,"));
        assert!(transcript.text.ends_with(" The answer is 4."));
    }

    #[test]
    fn run_cue_as_first_generated_token_still_switches() {
        // No warm-up window: a cue immediately after the prompt hands off.
        let (large, small) = two_model_clients(&["P: ", "Thus,", " easy", ".", THINK_END, " 4"]);
        let session = start_session("P: ", &cue_set(&["Thus,"]), Budgets::default()).unwrap();
        let transcript = run(session, &large, &small).unwrap();
        assert_eq!(transcript.events[0].direction, SwitchDirection::LargeToSmall);
        assert_eq!(transcript.events[0].at_position, 1);
        assert_eq!(transcript.tokens[0].record.text, "Thus,");
    }

    #[test]
    fn run_small_runs_are_sentence_bounded() {
        let (large, small) = two_model_clients(&[
            "Solve: ", "We", " start", " carefully", "Thus,", " x", " equals", " four", ".",
            " Indeed", " more", " steps", " ", "Wait,", " then", " y", " too", ".", " Finally",
            " conclude", THINK_END, " The", " answer", " is", " 4", ".",
        ]);
        let session =
            start_session("Solve: ", &cue_set(&["Thus,", "Wait,"]), Budgets::default()).unwrap();
        let transcript = run(session, &large, &small).unwrap();
        let answer_at = transcript
            .events
            .iter()
            .find(|e| e.direction == SwitchDirection::ToAnswerStage)
            .unwrap()
            .at_position;
        // Every maximal small run before the answer stage ends with a
        // token containing a sentence terminator.
        let reasoning = &transcript.tokens[..answer_at];
        let mut i = 0;
        while i < reasoning.len() {
            if reasoning[i].producer == Producer::Small {
                let mut j = i;
                while j + 1 < reasoning.len() && reasoning[j + 1].producer == Producer::Small {
                    j += 1;
                }
                assert!(
                    SENTENCE_TERMINATORS
                        .iter()
                        .any(|t| reasoning[j].record.text.contains(t)),
                    "small run ending at {j} lacks a terminator: {:?}",
                    reasoning[j].record.text
                );
                i = j + 1;
            } else {
                i += 1;
            }
        }
    }

    #[test]
    fn run_budget_ends_with_exact_context_length() {
        let (large, small) = two_model_clients(&[
            "Solve: ", "We", " start", " carefully", "Thus,", " x", " equals", " four", ".",
            " Indeed", " more", " steps", " ", "Wait,", " then", " y", " too", ".", " Finally",
            " conclude", THINK_END, " The", " answer", " is", " 4", ".",
        ]);
        let budgets = Budgets {
            max_total_tokens: 10,
            max_small_segment_tokens: 128,
        };
        let session = start_session("Solve: ", &cue_set(&["Thus,", "Wait,"]), budgets).unwrap();
        let transcript = run(session, &large, &small).unwrap();
        assert_eq!(transcript.stats.phase_at_end, Phase::Done);
        assert_eq!(transcript.stats.ended_by, Some(EndCause::Budget));
        assert_eq!(transcript.stats.total_tokens, 10);
    }

    #[test]
    fn run_aborts_with_partial_transcript_on_endpoint_failure() {
        // Small model has no script for the continuation: its first turn
        // misses and the run aborts with the large tokens retained.
        let backend = Arc::new(MockBackend::new(vec![Script::new(
            "large-m",
            vec![greedy("P"), greedy(" a"), greedy("Thus,"), greedy(" rest")],
        )]));
        let large = MockClient::new(backend.clone(), "large-m");
        let small = MockClient::new(backend, "small-m");
        let session = start_session("P", &cue_set(&["Thus,"]), Budgets::default()).unwrap();
        let transcript = run(session, &large, &small).unwrap();
        assert!(transcript.stats.aborted.is_some());
        assert_eq!(transcript.stats.ended_by, Some(EndCause::Aborted));
        assert_eq!(transcript.generated_text(), " aThus,");
    }

    #[test]
    fn prefill_conservation_over_a_full_run() {
        let (large, small) = two_model_clients(&[
            "Solve: ", "We", " start", " carefully", "Thus,", " x", " equals", " four", ".",
            " Indeed", " more", " steps", " ", "Wait,", " then", " y", " too", ".", " Finally",
            " conclude", THINK_END, " The", " answer", " is", " 4", ".",
        ]);
        let session =
            start_session("Solve: ", &cue_set(&["Thus,", "Wait,"]), Budgets::default()).unwrap();
        let transcript = run(session, &large, &small).unwrap();
        let universe = transcript.stats.prompt_tokens + transcript.stats.total_tokens;
        for model in [Producer::Large, Producer::Small] {
            let key = model.to_string();
            let prefilled = transcript.stats.prefill_tokens_by_model[&key];
            let pending = transcript.stats.pending_prefill_by_model[&key];
            let produced = match model {
                Producer::Large => transcript.stats.large_tokens,
                Producer::Small => transcript.stats.small_tokens,
            };
            assert_eq!(
                prefilled + produced + pending,
                universe,
                "conservation for {model}"
            );
        }
    }
}
